//! Encoder blocks and model assembly.
//!
//! The vanilla block is pre-norm:
//!   X_norm = LN(X); I = X + MHA(X_norm, X_norm, X_norm); X' = I + FFN(LN(I))
//! and the Luna/ConvLuna block is post-norm:
//!   P_packed = PackAttn(P, X, X); X_unpacked = MHA(X, P_packed, P_packed);
//!   I = LN(X + X_unpacked); P' = LN(P + P_packed); X' = LN(FFN(I) + I)
//! The normalization inconsistency between the two is deliberate and kept.
//!
//! ConvLuna differs from Luna only in the packing attention (learnable exp(τ)
//! divisor + key/value filters) and its weight sharing: packing and unpacking
//! share projections, W^K is shared within the block, and the value
//! projection is the identity. The two ablation architectures each keep
//! exactly one of the packing-attention changes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_attention, rescaled_attention, AttentionSpec, AttentionWeights, Divisor,
    FilterKind, FilterLayer, FilterSpec, TemperatureMode, ValueProjection,
};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::params::{ParamId, ParamKind, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "luna")]
    Luna,
    #[serde(rename = "convluna")]
    ConvLuna,
    #[serde(rename = "luna-only-scaling")]
    LunaOnlyScaling,
    #[serde(rename = "luna-only-filtering")]
    LunaOnlyFiltering,
}

impl Arch {
    pub fn uses_memory(self) -> bool {
        !matches!(self, Arch::Vanilla)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "memory-average")]
    MemoryAverage,
    #[serde(rename = "token-mean")]
    TokenMean,
    #[serde(rename = "cls")]
    Cls,
}

/// How much of the packing attention's projections the unpacking attention
/// reuses. `all` shares W^Q, W^K, W^O (and W^V when learned); `kv` shares
/// only the key/value path; `none` keeps the attentions fully separate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PackUnpackSharing {
    #[serde(rename = "all")]
    All,
    #[serde(rename = "kv")]
    KvOnly,
    #[serde(rename = "none")]
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    pub pack_unpack: PackUnpackSharing,
    pub identity_value: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub blocks: usize,
    pub d: usize,
    pub h: usize,
    pub mlp_dim: usize,
    #[serde(default)]
    pub memory_size: Option<usize>,
    #[serde(default = "FilterSpec::identity")]
    pub filter: FilterSpec,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub pooling: Option<Pooling>,
    #[serde(default)]
    pub dual_input: bool,
    #[serde(default)]
    pub sharing: Option<SharingConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::config("model: blocks must be >= 1".to_string()));
        }
        if self.d == 0 || self.h == 0 || self.d % self.h != 0 {
            return Err(Error::config(format!(
                "model: d={} must be a positive multiple of h={}",
                self.d, self.h
            )));
        }
        if self.mlp_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::config("model: mlp_dim, vocab_size, max_len must be positive".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model: num_classes must be >= 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("model: dropout {} outside [0, 1)", self.dropout)));
        }
        self.filter.validate()?;
        match self.arch {
            Arch::Vanilla => {
                if self.memory_size.is_some() {
                    return Err(Error::config("model: arch=vanilla forbids memory_size".to_string()));
                }
                if self.pooling == Some(Pooling::MemoryAverage) {
                    return Err(Error::config(
                        "model: memory-average pooling needs a memory architecture".to_string(),
                    ));
                }
                if self.sharing.is_some() {
                    return Err(Error::config(
                        "model: sharing only applies to convluna-family architectures".to_string(),
                    ));
                }
                if self.filter.kind != FilterKind::Identity {
                    return Err(Error::config("model: arch=vanilla takes no filter".to_string()));
                }
            }
            arch => {
                match self.memory_size {
                    Some(m) if m >= 1 => {}
                    _ => {
                        return Err(Error::config(
                            "model: memory architectures need memory_size >= 1".to_string(),
                        ))
                    }
                }
                match arch {
                    Arch::Luna | Arch::LunaOnlyScaling => {
                        if self.filter.kind != FilterKind::Identity {
                            return Err(Error::config(format!(
                                "model: arch={arch:?} applies no filtering (filter must be identity)"
                            )));
                        }
                    }
                    Arch::ConvLuna | Arch::LunaOnlyFiltering => {
                        if self.filter.kind == FilterKind::Identity {
                            return Err(Error::config(format!(
                                "model: arch={arch:?} needs a conv or maxpool filter"
                            )));
                        }
                    }
                    Arch::Vanilla => unreachable!(),
                }
                if self.sharing.is_some() && arch == Arch::Luna {
                    return Err(Error::config(
                        "model: sharing only applies to convluna-family architectures".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn pooling_resolved(&self) -> Pooling {
        self.pooling.unwrap_or(match self.arch {
            Arch::Vanilla => Pooling::TokenMean,
            _ => Pooling::MemoryAverage,
        })
    }

    pub fn sharing_resolved(&self) -> SharingConfig {
        match self.arch {
            Arch::Vanilla | Arch::Luna => SharingConfig {
                pack_unpack: PackUnpackSharing::Separate,
                identity_value: false,
            },
            _ => self.sharing.unwrap_or(SharingConfig {
                pack_unpack: PackUnpackSharing::All,
                identity_value: true,
            }),
        }
    }

    fn learnable_tau(&self) -> bool {
        matches!(self.arch, Arch::ConvLuna | Arch::LunaOnlyScaling)
    }
}

/// Dropout stream for one forward pass; `None` rng means evaluation mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'static> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply<E: Elem>(&mut self, g: &mut Graph<E>, x: TensorId) -> Result<TensorId> {
        let rng = match (&mut self.rng, self.rate) {
            (Some(rng), rate) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let n = g.numel(x);
        let keep_scale = E::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<E> = (0..n)
            .map(|_| if rng.gen::<f64>() >= self.rate { keep_scale } else { E::zero() })
            .collect();
        g.mul_const(x, mask)
    }
}

struct LayerNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormLayer {
    fn register<E: Elem>(ps: &mut Parameters<E>, prefix: &str, d: usize, seed: u64) -> Result<Self> {
        Ok(LayerNormLayer {
            gamma: ps.register(&format!("{prefix}.gamma"), 1, d, ParamKind::NormGain, seed)?,
            beta: ps.register(&format!("{prefix}.beta"), 1, d, ParamKind::NormBias, seed)?,
        })
    }

    fn forward<E: Elem>(&self, g: &mut Graph<E>, ps: &Parameters<E>, x: TensorId) -> Result<TensorId> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn register<E: Elem>(
        ps: &mut Parameters<E>,
        prefix: &str,
        d: usize,
        mlp: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(FeedForward {
            w1: ps.register(&format!("{prefix}.w1"), d, mlp, ParamKind::Matrix, seed)?,
            b1: ps.register(&format!("{prefix}.b1"), 1, mlp, ParamKind::Bias, seed)?,
            w2: ps.register(&format!("{prefix}.w2"), mlp, d, ParamKind::Matrix, seed)?,
            b2: ps.register(&format!("{prefix}.b2"), 1, d, ParamKind::Bias, seed)?,
        })
    }

    fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        ps: &Parameters<E>,
        x: TensorId,
        dropout: &mut Dropout,
    ) -> Result<TensorId> {
        let w1 = g.param(ps, self.w1);
        let b1 = g.param(ps, self.b1);
        let w2 = g.param(ps, self.w2);
        let b2 = g.param(ps, self.b2);
        let hidden = g.matmul(x, w1)?;
        let hidden = g.add_row_broadcast(hidden, b1)?;
        let hidden = g.gelu(hidden);
        let hidden = dropout.apply(g, hidden)?;
        let out = g.matmul(hidden, w2)?;
        g.add_row_broadcast(out, b2)
    }
}

/// Sequence/memory activations flowing between Luna-family blocks.
#[derive(Clone, Copy, Debug)]
pub struct LunaState {
    pub x: TensorId,
    pub p: TensorId,
}

/// Post-softmax attention probabilities exposed per block for diagnostics:
/// the packing attention for memory blocks (with the unpacking attention as
/// secondary), self-attention for vanilla.
pub struct BlockProbes {
    pub primary_probs: Vec<TensorId>,
    pub secondary_probs: Vec<TensorId>,
}

pub struct VanillaBlock {
    spec: AttentionSpec,
    ln1: LayerNormLayer,
    attn: AttentionWeights,
    ln2: LayerNormLayer,
    ffn: FeedForward,
}

impl VanillaBlock {
    pub fn register<E: Elem>(
        ps: &mut Parameters<E>,
        prefix: &str,
        d: usize,
        h: usize,
        mlp: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = AttentionSpec::new(d, h);
        Ok(VanillaBlock {
            spec,
            ln1: LayerNormLayer::register(ps, &format!("{prefix}.ln1"), d, seed)?,
            attn: AttentionWeights::register(ps, &format!("{prefix}.attn"), &spec, seed)?,
            ln2: LayerNormLayer::register(ps, &format!("{prefix}.ln2"), d, seed)?,
            ffn: FeedForward::register(ps, &format!("{prefix}.ffn"), d, mlp, seed)?,
        })
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        ps: &Parameters<E>,
        x: TensorId,
        mask: Option<&[bool]>,
        dropout: &mut Dropout,
    ) -> Result<(TensorId, BlockProbes)> {
        let x_norm = self.ln1.forward(g, ps, x)?;
        g.push_scope("self_attn");
        let attn = multi_head_attention(g, ps, &self.attn, &self.spec, x_norm, x_norm, x_norm, mask)?;
        g.pop_scope();
        let attn_out = dropout.apply(g, attn.out)?;
        let i = g.add(x, attn_out)?;
        let i_norm = self.ln2.forward(g, ps, i)?;
        g.push_scope("ffn");
        let ffn_out = self.ffn.forward(g, ps, i_norm, dropout)?;
        g.pop_scope();
        let x_out = g.add(i, ffn_out)?;
        Ok((x_out, BlockProbes { primary_probs: attn.probs, secondary_probs: Vec::new() }))
    }
}

/// Luna / ConvLuna block. Pure Luna is the special case: separate weights,
/// learned value projections, fixed √d_h divisor, identity filters.
pub struct MemoryBlock {
    spec: AttentionSpec,
    pack: AttentionWeights,
    unpack: AttentionWeights,
    pub tau: Option<ParamId>,
    filter_k: FilterLayer,
    filter_v: FilterLayer,
    ln_i: LayerNormLayer,
    ln_p: LayerNormLayer,
    ln_x: LayerNormLayer,
    ffn: FeedForward,
}

pub struct MemoryBlockOptions {
    pub filter: FilterSpec,
    pub learnable_tau: bool,
    pub sharing: SharingConfig,
}

impl MemoryBlockOptions {
    pub fn luna() -> Self {
        MemoryBlockOptions {
            filter: FilterSpec::identity(),
            learnable_tau: false,
            sharing: SharingConfig {
                pack_unpack: PackUnpackSharing::Separate,
                identity_value: false,
            },
        }
    }
}

impl MemoryBlock {
    pub fn register<E: Elem>(
        ps: &mut Parameters<E>,
        prefix: &str,
        d: usize,
        h: usize,
        mlp: usize,
        opts: &MemoryBlockOptions,
        seed: u64,
    ) -> Result<Self> {
        let mut spec = AttentionSpec::new(d, h);
        spec.value_projection = if opts.sharing.identity_value {
            ValueProjection::Identity
        } else {
            ValueProjection::Learned
        };
        spec.temperature_mode = if opts.learnable_tau {
            TemperatureMode::LearnableExpTau
        } else {
            TemperatureMode::FixedSqrt
        };
        let pack = AttentionWeights::register(ps, &format!("{prefix}.pack"), &spec, seed)?;
        let unpack = match opts.sharing.pack_unpack {
            PackUnpackSharing::All => pack,
            PackUnpackSharing::KvOnly => {
                let wq = ps.register(&format!("{prefix}.unpack.wq"), d, d, ParamKind::Matrix, seed)?;
                let wo = ps.register(&format!("{prefix}.unpack.wo"), d, d, ParamKind::Matrix, seed)?;
                AttentionWeights { wq, wk: pack.wk, wv: pack.wv, wo }
            }
            PackUnpackSharing::Separate => {
                AttentionWeights::register(ps, &format!("{prefix}.unpack"), &spec, seed)?
            }
        };
        let tau = if opts.learnable_tau {
            Some(ps.register(&format!("{prefix}.pack.tau"), 1, 1, ParamKind::Tau, seed)?)
        } else {
            None
        };
        let (filter_k, filter_v) = match opts.filter.kind {
            FilterKind::Identity => (FilterLayer::identity(), FilterLayer::identity()),
            _ => (
                FilterLayer::register(ps, &format!("{prefix}.filter_k"), d, opts.filter, seed)?,
                FilterLayer::register(ps, &format!("{prefix}.filter_v"), d, opts.filter, seed)?,
            ),
        };
        Ok(MemoryBlock {
            spec,
            pack,
            unpack,
            tau,
            filter_k,
            filter_v,
            ln_i: LayerNormLayer::register(ps, &format!("{prefix}.ln_i"), d, seed)?,
            ln_p: LayerNormLayer::register(ps, &format!("{prefix}.ln_p"), d, seed)?,
            ln_x: LayerNormLayer::register(ps, &format!("{prefix}.ln_x"), d, seed)?,
            ffn: FeedForward::register(ps, &format!("{prefix}.ffn"), d, mlp, seed)?,
        })
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        ps: &Parameters<E>,
        state: LunaState,
        mask: Option<&[bool]>,
        dropout: &mut Dropout,
    ) -> Result<(LunaState, BlockProbes)> {
        let divisor = match self.tau {
            Some(tau) => Divisor::ExpTau(tau),
            None => Divisor::SqrtHeadDim,
        };
        g.push_scope("packing");
        let packed = rescaled_attention(
            g,
            ps,
            &self.pack,
            &self.spec,
            &self.filter_k,
            &self.filter_v,
            divisor,
            state.p,
            state.x,
            state.x,
            mask,
        )?;
        g.pop_scope();
        let p_packed = dropout.apply(g, packed.out)?;

        g.push_scope("unpacking");
        let unpacked =
            multi_head_attention(g, ps, &self.unpack, &self.spec, state.x, p_packed, p_packed, None)?;
        g.pop_scope();
        let x_unpacked = dropout.apply(g, unpacked.out)?;

        let x_res = g.add(state.x, x_unpacked)?;
        let i = self.ln_i.forward(g, ps, x_res)?;
        let p_res = g.add(state.p, p_packed)?;
        let p_out = self.ln_p.forward(g, ps, p_res)?;
        g.push_scope("ffn");
        let ffn_out = self.ffn.forward(g, ps, i, dropout)?;
        g.pop_scope();
        let ffn_res = g.add(ffn_out, i)?;
        let x_out = self.ln_x.forward(g, ps, ffn_res)?;
        Ok((
            LunaState { x: x_out, p: p_out },
            BlockProbes { primary_probs: packed.probs, secondary_probs: unpacked.probs },
        ))
    }
}

enum AnyBlock {
    Vanilla(VanillaBlock),
    Memory(MemoryBlock),
}

/// Assembled model: embeddings, block stack, memory matrix, pooling head.
pub struct Model<E: Elem> {
    pub cfg: ModelConfig,
    pub params: Parameters<E>,
    pub seed: u64,
    tok_emb: ParamId,
    pos_emb: ParamId,
    memory: Option<ParamId>,
    blocks: Vec<AnyBlock>,
    cls_w: ParamId,
    cls_b: ParamId,
}

pub struct ForwardOutput {
    pub logits: TensorId,
    /// Pooled representation fed to the classifier ([1×d], or [1×2d] for
    /// dual-input models).
    pub rep: TensorId,
    /// Per block, the post-softmax probabilities of the block's primary
    /// attention (packing attention for memory blocks).
    pub probes: Vec<BlockProbes>,
}

impl<E: Elem> Model<E> {
    /// Build the full model for `cfg`, with deterministic seeded init.
    pub fn assemble(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps: Parameters<E> = Parameters::new();
        let d = cfg.d;
        let tok_emb = ps.register("embed.tok", cfg.vocab_size, d, ParamKind::Embedding, seed)?;
        let pos_emb = ps.register("embed.pos", cfg.max_len, d, ParamKind::Embedding, seed)?;
        let memory = match cfg.memory_size {
            Some(m) => Some(ps.register("memory.p0", m, d, ParamKind::Memory, seed)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let prefix = format!("block{b}");
            let block = match cfg.arch {
                Arch::Vanilla => AnyBlock::Vanilla(VanillaBlock::register(
                    &mut ps, &prefix, d, cfg.h, cfg.mlp_dim, seed,
                )?),
                _ => {
                    let opts = MemoryBlockOptions {
                        filter: cfg.filter,
                        learnable_tau: cfg.learnable_tau(),
                        sharing: cfg.sharing_resolved(),
                    };
                    AnyBlock::Memory(MemoryBlock::register(
                        &mut ps, &prefix, d, cfg.h, cfg.mlp_dim, &opts, seed,
                    )?)
                }
            };
            blocks.push(block);
        }
        let cls_in = if cfg.dual_input { 2 * d } else { d };
        let cls_w = ps.register("classifier.w", cls_in, cfg.num_classes, ParamKind::Matrix, seed)?;
        let cls_b = ps.register("classifier.b", 1, cfg.num_classes, ParamKind::Bias, seed)?;
        Ok(Model { cfg, params: ps, seed, tok_emb, pos_emb, memory, blocks, cls_w, cls_b })
    }

    pub fn memory_param(&self) -> Option<ParamId> {
        self.memory
    }

    /// τ parameters in block order (empty unless the packing attention has a
    /// learnable temperature).
    pub fn tau_params(&self) -> Vec<(usize, ParamId)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| match b {
                AnyBlock::Memory(m) => m.tau.map(|t| (i, t)),
                AnyBlock::Vanilla(_) => None,
            })
            .collect()
    }

    /// Encode one token sequence into a pooled [1×d] representation.
    fn encode(
        &self,
        g: &mut Graph<E>,
        tokens: &[usize],
        mask: Option<&[bool]>,
        dropout: &mut Dropout,
        probes: &mut Vec<BlockProbes>,
    ) -> Result<TensorId> {
        if tokens.is_empty() {
            return Err(Error::input("model: empty token sequence".to_string()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::input(format!(
                "model: sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(m) = mask {
            if m.len() != tokens.len() {
                return Err(Error::input(format!(
                    "model: mask has {} entries for {} tokens",
                    m.len(),
                    tokens.len()
                )));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::input("model: mask leaves no valid positions".to_string()));
            }
        }
        let l = tokens.len();
        let tok_table = g.param(&self.params, self.tok_emb);
        let tok = g.embed_rows(tok_table, tokens)?;
        let pos_table = g.param(&self.params, self.pos_emb);
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embed_rows(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = dropout.apply(g, x)?;

        match self.cfg.arch {
            Arch::Vanilla => {
                for (bi, block) in self.blocks.iter().enumerate() {
                    let AnyBlock::Vanilla(block) = block else { unreachable!() };
                    g.push_scope(&format!("block{bi}"));
                    let (x_out, probe) = block.forward(g, &self.params, x, mask, dropout)?;
                    g.pop_scope();
                    x = x_out;
                    probes.push(probe);
                }
                match self.cfg.pooling_resolved() {
                    Pooling::TokenMean => g.mean_rows(x, mask),
                    Pooling::Cls => {
                        let mut first = vec![false; l];
                        first[0] = true;
                        g.mean_rows(x, Some(&first))
                    }
                    Pooling::MemoryAverage => unreachable!("validated"),
                }
            }
            _ => {
                // Positions are added to token embeddings only; the memory
                // matrix enters block 1 as its own learned parameter.
                let p0 = g.param(&self.params, self.memory.expect("memory arch"));
                let mut state = LunaState { x, p: p0 };
                for (bi, block) in self.blocks.iter().enumerate() {
                    let AnyBlock::Memory(block) = block else { unreachable!() };
                    g.push_scope(&format!("block{bi}"));
                    let (next, probe) = block.forward(g, &self.params, state, mask, dropout)?;
                    g.pop_scope();
                    state = next;
                    probes.push(probe);
                }
                match self.cfg.pooling_resolved() {
                    Pooling::MemoryAverage => g.mean_rows(state.p, None),
                    Pooling::TokenMean => g.mean_rows(state.x, mask),
                    Pooling::Cls => {
                        let mut first = vec![false; l];
                        first[0] = true;
                        g.mean_rows(state.x, Some(&first))
                    }
                }
            }
        }
    }

    fn classify(&self, g: &mut Graph<E>, rep: TensorId) -> Result<TensorId> {
        let w = g.param(&self.params, self.cls_w);
        let b = g.param(&self.params, self.cls_b);
        let logits = g.matmul(rep, w)?;
        g.add_row_broadcast(logits, b)
    }

    /// Forward for single-input tasks → [1×num_classes] logits.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        tokens: &[usize],
        mask: Option<&[bool]>,
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        if self.cfg.dual_input {
            return Err(Error::usage("model: dual_input config needs forward_pair".to_string()));
        }
        let mut probes = Vec::new();
        let rep = self.encode(g, tokens, mask, dropout, &mut probes)?;
        let logits = self.classify(g, rep)?;
        Ok(ForwardOutput { logits, rep, probes })
    }

    /// Forward for matching tasks: one shared-weight encoder on both inputs,
    /// classifier on the concatenation [r_a, r_b].
    pub fn forward_pair(
        &self,
        g: &mut Graph<E>,
        a: (&[usize], Option<&[bool]>),
        b: (&[usize], Option<&[bool]>),
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        if !self.cfg.dual_input {
            return Err(Error::usage("model: forward_pair needs dual_input config".to_string()));
        }
        let mut probes = Vec::new();
        let rep_a = self.encode(g, a.0, a.1, dropout, &mut probes)?;
        let rep_b = self.encode(g, b.0, b.1, dropout, &mut probes)?;
        let rep = g.concat_cols(&[rep_a, rep_b])?;
        let logits = self.classify(g, rep)?;
        Ok(ForwardOutput { logits, rep, probes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::matmul_raw;

    // ── straight-line reference evaluation (no graph, plain loops) ──

    fn nv_softmax(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    fn nv_layer_norm(x: &[f64], rows: usize, d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
            }
        }
        out
    }

    fn nv_gelu(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2.0f64.sqrt())))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn nv_mha(
        q: &[f64],
        lq: usize,
        kv: &[f64],
        lk: usize,
        d: usize,
        h: usize,
        wq: &[f64],
        wk: &[f64],
        wv: Option<&[f64]>,
        wo: &[f64],
    ) -> Vec<f64> {
        let dh = d / h;
        let qp = matmul_raw(q, wq, lq, d, d);
        let kp = matmul_raw(kv, wk, lk, d, d);
        let vp = wv.map(|w| matmul_raw(kv, w, lk, d, d)).unwrap_or_else(|| kv.to_vec());
        let mut concat = vec![0.0; lq * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..lq {
                let mut scores = vec![0.0; lk];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += qp[i * d + off + c] * kp[j * d + off + c];
                    }
                    *s = dot / (dh as f64).sqrt();
                }
                nv_softmax(&mut scores);
                for c in 0..dh {
                    let mut acc = 0.0;
                    for (j, &p) in scores.iter().enumerate() {
                        acc += p * vp[j * d + off + c];
                    }
                    concat[i * d + off + c] = acc;
                }
            }
        }
        matmul_raw(&concat, wo, lq, d, d)
    }

    fn nv_ffn(x: &[f64], rows: usize, d: usize, mlp: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
        let mut hidden = matmul_raw(x, w1, rows, d, mlp);
        for r in 0..rows {
            for j in 0..mlp {
                hidden[r * mlp + j] += b1[j];
            }
        }
        let hidden = nv_gelu(&hidden);
        let mut out = matmul_raw(&hidden, w2, rows, mlp, d);
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] += b2[j];
            }
        }
        out
    }

    fn pdata(ps: &Parameters<f64>, name: &str) -> Vec<f64> {
        ps.get(ps.lookup(name).expect(name)).data.clone()
    }

    fn set_zero(ps: &mut Parameters<f64>, name: &str) {
        let id = ps.lookup(name).expect(name);
        ps.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::params::seeded_rng(seed, &[0xb10c]);
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn vanilla_block_matches_straight_line_oracle() {
        let (l, d, h, mlp) = (5, 8, 2, 16);
        let mut ps: Parameters<f64> = Parameters::new();
        let block = VanillaBlock::register(&mut ps, "blk", d, h, mlp, 42).unwrap();

        let x_data = rand_vec(l * d, 7);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(l, d, x_data.clone(), false).unwrap();
        let (out, _) = block.forward(&mut g, &ps, x, None, &mut Dropout::off()).unwrap();

        // X_norm = LN(X); I = X + MHA(X_norm, ...); X' = I + FFN(LN(I))
        let x_norm = nv_layer_norm(&x_data, l, d, &pdata(&ps, "blk.ln1.gamma"), &pdata(&ps, "blk.ln1.beta"));
        let attn = nv_mha(
            &x_norm, l, &x_norm, l, d, h,
            &pdata(&ps, "blk.attn.wq"), &pdata(&ps, "blk.attn.wk"),
            Some(&pdata(&ps, "blk.attn.wv")), &pdata(&ps, "blk.attn.wo"),
        );
        let i: Vec<f64> = x_data.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let i_norm = nv_layer_norm(&i, l, d, &pdata(&ps, "blk.ln2.gamma"), &pdata(&ps, "blk.ln2.beta"));
        let ffn = nv_ffn(
            &i_norm, l, d, mlp,
            &pdata(&ps, "blk.ffn.w1"), &pdata(&ps, "blk.ffn.b1"),
            &pdata(&ps, "blk.ffn.w2"), &pdata(&ps, "blk.ffn.b2"),
        );
        let expected: Vec<f64> = i.iter().zip(&ffn).map(|(a, b)| a + b).collect();

        assert!(max_abs_diff(g.data(out), &expected) < 1e-10);
    }

    #[test]
    fn luna_block_matches_straight_line_oracle() {
        let (l, m, d, h, mlp) = (6, 3, 8, 2, 16);
        let mut ps: Parameters<f64> = Parameters::new();
        let block = MemoryBlock::register(&mut ps, "blk", d, h, mlp, &MemoryBlockOptions::luna(), 42).unwrap();

        let x_data = rand_vec(l * d, 8);
        let p_data = rand_vec(m * d, 9);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(l, d, x_data.clone(), false).unwrap();
        let p = g.leaf(m, d, p_data.clone(), false).unwrap();
        let (state, _) = block
            .forward(&mut g, &ps, LunaState { x, p }, None, &mut Dropout::off())
            .unwrap();

        let p_packed = nv_mha(
            &p_data, m, &x_data, l, d, h,
            &pdata(&ps, "blk.pack.wq"), &pdata(&ps, "blk.pack.wk"),
            Some(&pdata(&ps, "blk.pack.wv")), &pdata(&ps, "blk.pack.wo"),
        );
        let x_unpacked = nv_mha(
            &x_data, l, &p_packed, m, d, h,
            &pdata(&ps, "blk.unpack.wq"), &pdata(&ps, "blk.unpack.wk"),
            Some(&pdata(&ps, "blk.unpack.wv")), &pdata(&ps, "blk.unpack.wo"),
        );
        let x_res: Vec<f64> = x_data.iter().zip(&x_unpacked).map(|(a, b)| a + b).collect();
        let i = nv_layer_norm(&x_res, l, d, &pdata(&ps, "blk.ln_i.gamma"), &pdata(&ps, "blk.ln_i.beta"));
        let p_res: Vec<f64> = p_data.iter().zip(&p_packed).map(|(a, b)| a + b).collect();
        let p_expected = nv_layer_norm(&p_res, m, d, &pdata(&ps, "blk.ln_p.gamma"), &pdata(&ps, "blk.ln_p.beta"));
        let ffn = nv_ffn(
            &i, l, d, mlp,
            &pdata(&ps, "blk.ffn.w1"), &pdata(&ps, "blk.ffn.b1"),
            &pdata(&ps, "blk.ffn.w2"), &pdata(&ps, "blk.ffn.b2"),
        );
        let ffn_res: Vec<f64> = ffn.iter().zip(&i).map(|(a, b)| a + b).collect();
        let x_expected = nv_layer_norm(&ffn_res, l, d, &pdata(&ps, "blk.ln_x.gamma"), &pdata(&ps, "blk.ln_x.beta"));

        assert!(max_abs_diff(g.data(state.x), &x_expected) < 1e-10);
        assert!(max_abs_diff(g.data(state.p), &p_expected) < 1e-10);
    }

    #[test]
    fn vanilla_zero_projections_is_identity() {
        let (l, d) = (4, 8);
        let mut ps: Parameters<f64> = Parameters::new();
        let block = VanillaBlock::register(&mut ps, "blk", d, 2, 16, 1).unwrap();
        set_zero(&mut ps, "blk.attn.wo");
        set_zero(&mut ps, "blk.ffn.w2");
        set_zero(&mut ps, "blk.ffn.b2");

        let x_data = rand_vec(l * d, 3);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(l, d, x_data.clone(), false).unwrap();
        let (out, _) = block.forward(&mut g, &ps, x, None, &mut Dropout::off()).unwrap();
        assert_eq!(g.data(out), x_data.as_slice());
    }

    #[test]
    fn luna_zero_projections_collapse_to_norms() {
        let (l, m, d) = (5, 2, 8);
        let mut ps: Parameters<f64> = Parameters::new();
        let block = MemoryBlock::register(&mut ps, "blk", d, 2, 16, &MemoryBlockOptions::luna(), 1).unwrap();
        for name in ["blk.pack.wo", "blk.unpack.wo", "blk.ffn.w2", "blk.ffn.b2"] {
            set_zero(&mut ps, name);
        }

        let x_data = rand_vec(l * d, 4);
        let p_data = rand_vec(m * d, 5);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(l, d, x_data.clone(), false).unwrap();
        let p = g.leaf(m, d, p_data.clone(), false).unwrap();
        let (state, _) = block
            .forward(&mut g, &ps, LunaState { x, p }, None, &mut Dropout::off())
            .unwrap();

        // P' = LN(P) exactly; X' = LN(LN(X)) which is LN(X) up to the ε term.
        let ones = vec![1.0; d];
        let zeros = vec![0.0; d];
        let p_expected = nv_layer_norm(&p_data, m, d, &pdata(&ps, "blk.ln_p.gamma"), &pdata(&ps, "blk.ln_p.beta"));
        assert!(max_abs_diff(g.data(state.p), &p_expected) < 1e-12);
        let x_ln = nv_layer_norm(&x_data, l, d, &ones, &zeros);
        assert!(max_abs_diff(g.data(state.x), &x_ln) < 1e-4);
    }

    #[test]
    fn convluna_neutral_settings_reduce_to_luna_bit_for_bit() {
        // identity filter, τ frozen at ln √d_h, sharing disabled, learned W^V
        let (l, m, d, h, mlp) = (6, 3, 8, 2, 16);
        let mut luna_ps: Parameters<f64> = Parameters::new();
        let luna = MemoryBlock::register(&mut luna_ps, "blk", d, h, mlp, &MemoryBlockOptions::luna(), 11).unwrap();

        let neutral = MemoryBlockOptions {
            filter: FilterSpec::identity(),
            learnable_tau: true,
            sharing: SharingConfig { pack_unpack: PackUnpackSharing::Separate, identity_value: false },
        };
        let mut conv_ps: Parameters<f64> = Parameters::new();
        let conv = MemoryBlock::register(&mut conv_ps, "blk", d, h, mlp, &neutral, 23).unwrap();

        // matched weights: copy by name, then freeze τ at ln √d_h
        let names: Vec<String> = luna_ps.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let src = pdata(&luna_ps, &name);
            let dst = conv_ps.lookup(&name).expect("matching name");
            conv_ps.get_mut(dst).data = src;
        }
        let tau = conv_ps.lookup("blk.pack.tau").unwrap();
        conv_ps.get_mut(tau).data = vec![((d / h) as f64).sqrt().ln()];
        conv_ps.get_mut(tau).trainable = false;

        let x_data = rand_vec(l * d, 31);
        let p_data = rand_vec(m * d, 32);

        let mut g1: Graph<f64> = Graph::new();
        let x = g1.leaf(l, d, x_data.clone(), false).unwrap();
        let p = g1.leaf(m, d, p_data.clone(), false).unwrap();
        let (s1, _) = luna.forward(&mut g1, &luna_ps, LunaState { x, p }, None, &mut Dropout::off()).unwrap();

        let mut g2: Graph<f64> = Graph::new();
        let x = g2.leaf(l, d, x_data, false).unwrap();
        let p = g2.leaf(m, d, p_data, false).unwrap();
        let (s2, _) = conv.forward(&mut g2, &conv_ps, LunaState { x, p }, None, &mut Dropout::off()).unwrap();

        for (a, b) in g1.data(s1.x).iter().zip(g2.data(s2.x)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in g1.data(s1.p).iter().zip(g2.data(s2.p)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn memory_of_one_collapses_unpacking_to_single_key() {
        let (l, d) = (5, 8);
        let mut ps: Parameters<f64> = Parameters::new();
        let block = MemoryBlock::register(&mut ps, "blk", d, 2, 16, &MemoryBlockOptions::luna(), 9).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(l, d, rand_vec(l * d, 1), false).unwrap();
        let p = g.leaf(1, d, rand_vec(d, 2), false).unwrap();
        let (_, probes) = block
            .forward(&mut g, &ps, LunaState { x, p }, None, &mut Dropout::off())
            .unwrap();
        // packing: one query row over l keys; unpacking: single key → probs 1
        for probs in &probes.primary_probs {
            assert_eq!(g.shape(*probs), (1, l));
        }
        for probs in &probes.secondary_probs {
            assert_eq!(g.shape(*probs), (l, 1));
            for &v in g.data(*probs) {
                assert_eq!(v, 1.0);
            }
        }
    }

    fn small_convluna_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::ConvLuna,
            blocks: 2,
            d: 8,
            h: 2,
            mlp_dim: 16,
            memory_size: Some(4),
            filter: FilterSpec { kind: FilterKind::Conv, kernel: 3, stride: 1 },
            vocab_size: 11,
            max_len: 12,
            num_classes: 3,
            dropout: 0.0,
            pooling: None,
            dual_input: false,
            sharing: None,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = small_convluna_cfg();
        let model: Model<f64> = Model::assemble(cfg.clone(), 0).unwrap();
        let (d, mlp, k, m, vocab, max_len, classes) =
            (cfg.d, cfg.mlp_dim, cfg.filter.kernel, cfg.memory_size.unwrap(), cfg.vocab_size, cfg.max_len, cfg.num_classes);
        // default convluna sharing: wq/wk/wo shared pack↔unpack, W^V identity
        let per_block = 3 * d * d          // wq, wk, wo
            + 1                            // tau
            + 2 * (d * k + d)              // two conv filters with bias
            + 3 * 2 * d                    // three layer norms
            + (d * mlp + mlp + mlp * d + d); // ffn
        let expected = vocab * d + max_len * d + m * d + cfg.blocks * per_block + d * classes + classes;
        assert_eq!(model.params.total_elements(), expected);

        // pure luna: separate attentions with learned values, no tau/filters
        let luna_cfg = ModelConfig {
            arch: Arch::Luna,
            filter: FilterSpec::identity(),
            sharing: None,
            ..cfg
        };
        let luna: Model<f64> = Model::assemble(luna_cfg, 0).unwrap();
        let per_block = 2 * 4 * d * d + 3 * 2 * d + (d * mlp + mlp + mlp * d + d);
        let expected = vocab * d + max_len * d + m * d + 2 * per_block + d * classes + classes;
        assert_eq!(luna.params.total_elements(), expected);
    }

    #[test]
    fn ablation_architectures_map_to_single_changes() {
        let mut cfg = small_convluna_cfg();
        cfg.arch = Arch::LunaOnlyScaling;
        cfg.filter = FilterSpec::identity();
        let only_scaling: Model<f64> = Model::assemble(cfg.clone(), 0).unwrap();
        assert!(only_scaling.params.lookup("block0.pack.tau").is_some());
        assert!(only_scaling.params.lookup("block0.filter_k.kernel").is_none());

        cfg.arch = Arch::LunaOnlyFiltering;
        cfg.filter = FilterSpec { kind: FilterKind::Conv, kernel: 3, stride: 1 };
        let only_filtering: Model<f64> = Model::assemble(cfg, 0).unwrap();
        assert!(only_filtering.params.lookup("block0.pack.tau").is_none());
        assert!(only_filtering.params.lookup("block0.filter_k.kernel").is_some());
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let mut cfg = small_convluna_cfg();
        cfg.arch = Arch::Vanilla;
        assert!(cfg.validate().is_err()); // vanilla forbids memory_size

        let mut cfg = small_convluna_cfg();
        cfg.memory_size = None;
        assert!(cfg.validate().is_err()); // memory arch needs memory_size

        let mut cfg = small_convluna_cfg();
        cfg.arch = Arch::Luna;
        assert!(cfg.validate().is_err()); // luna applies no filtering

        let mut cfg = small_convluna_cfg();
        cfg.filter = FilterSpec::identity();
        assert!(cfg.validate().is_err()); // convluna needs a filter

        let mut cfg = small_convluna_cfg();
        cfg.d = 9;
        assert!(cfg.validate().is_err()); // d % h != 0
    }

    #[test]
    fn model_is_invariant_to_padded_token_ids() {
        for arch_cfg in [small_convluna_cfg(), {
            let mut c = small_convluna_cfg();
            c.arch = Arch::Vanilla;
            c.memory_size = None;
            c.filter = FilterSpec::identity();
            c
        }] {
            let model: Model<f64> = Model::assemble(arch_cfg, 3).unwrap();
            let valid = [true, true, true, true, false, false];
            let run = |pad_id: usize| -> Vec<f64> {
                let mut g = Graph::new();
                let tokens = [1usize, 2, 3, 4, pad_id, pad_id];
                let out = model.forward(&mut g, &tokens, Some(&valid), &mut Dropout::off()).unwrap();
                g.data(out.logits).to_vec()
            };
            let a = run(0);
            let b = run(9);
            assert!(max_abs_diff(&a, &b) < 1e-10, "arch {:?}", model.cfg.arch);
        }
    }

    #[test]
    fn dual_input_shares_weights_between_halves() {
        let mut cfg = small_convluna_cfg();
        cfg.dual_input = true;
        let model: Model<f64> = Model::assemble(cfg, 5).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let tokens = [3usize, 1, 4, 1, 5];
        let out = model
            .forward_pair(&mut g, (&tokens, None), (&tokens, None), &mut Dropout::off())
            .unwrap();
        let rep = g.data(out.rep);
        let (_, width) = g.shape(out.rep);
        assert_eq!(width, 16);
        for j in 0..8 {
            assert_eq!(rep[j].to_bits(), rep[8 + j].to_bits());
        }
        assert_eq!(g.shape(out.logits), (1, 3));
    }

    #[test]
    fn memory_average_pooling_with_single_cell_is_the_cell() {
        let mut cfg = small_convluna_cfg();
        cfg.memory_size = Some(1);
        let model: Model<f64> = Model::assemble(cfg, 6).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let out = model.forward(&mut g, &[1, 2, 3], None, &mut Dropout::off()).unwrap();
        assert_eq!(g.shape(out.rep), (1, 8));
    }

    #[test]
    fn assembly_and_forward_are_deterministic() {
        let cfg = small_convluna_cfg();
        let m1: Model<f64> = Model::assemble(cfg.clone(), 77).unwrap();
        let m2: Model<f64> = Model::assemble(cfg, 77).unwrap();
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
        let run = |m: &Model<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &[5, 6, 7, 8], None, &mut Dropout::off()).unwrap();
            g.data(out.logits).to_vec()
        };
        let a = run(&m1);
        let b = run(&m2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn overlong_sequence_is_input_error() {
        let model: Model<f64> = Model::assemble(small_convluna_cfg(), 0).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let tokens: Vec<usize> = (0..13).map(|i| i % 11).collect();
        let err = match model.forward(&mut g, &tokens, None, &mut Dropout::off()) {
            Err(e) => e,
            Ok(_) => panic!("expected an input error"),
        };
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn dropout_zero_rate_is_identity_even_in_train_mode() {
        let mut rng = crate::params::seeded_rng(1, &[2]);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(2, 3, rand_vec(6, 3), false).unwrap();
        let mut dropout = Dropout::new(0.0, &mut rng);
        let y = dropout.apply(&mut g, x).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }
}
