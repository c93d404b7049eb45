//! Multi-head attention, the rescaled/filtered packing attention, and the
//! length-wise filter (depthwise conv / max pool) applied to keys and values.
//!
//! Both attention variants run through one core routine; they differ only in
//! the logit divisor (fixed √d_h vs exp(τ)) and the optional key/value
//! filters. With τ = ln √d_h and identity filters the rescaled path is
//! bit-identical to the standard one.

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{same_coverage_padding, Graph, TensorId};
use crate::params::{ParamId, ParamKind, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureMode {
    #[serde(rename = "fixed-sqrt")]
    FixedSqrt,
    #[serde(rename = "learnable-exp-tau")]
    LearnableExpTau,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueProjection {
    #[serde(rename = "learned")]
    Learned,
    #[serde(rename = "identity")]
    Identity,
}

/// Static attention configuration: width, heads, temperature handling and
/// whether the value path has a learned projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub d: usize,
    pub h: usize,
    pub temperature_mode: TemperatureMode,
    pub value_projection: ValueProjection,
}

impl AttentionSpec {
    pub fn new(d: usize, h: usize) -> Self {
        AttentionSpec {
            d,
            h,
            temperature_mode: TemperatureMode::FixedSqrt,
            value_projection: ValueProjection::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 {
            return Err(Error::config(format!(
                "attention: d={} and h={} must be positive",
                self.d, self.h
            )));
        }
        if self.d % self.h != 0 {
            return Err(Error::config(format!(
                "attention: d={} not divisible by h={}",
                self.d, self.h
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "maxpool")]
    MaxPool,
}

/// Length-wise filter configuration: kernel K, stride S, same-coverage
/// padding (max pool pads with −∞, conv with zeros), output length ceil(L/S).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub kernel: usize,
    pub stride: usize,
}

impl FilterSpec {
    pub fn identity() -> Self {
        FilterSpec { kind: FilterKind::Identity, kernel: 1, stride: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::config(format!(
                "filter: kernel {} and stride {} must be >= 1",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn out_len(&self, len: usize) -> usize {
        match self.kind {
            FilterKind::Identity => len,
            _ => same_coverage_padding(len, self.kernel, self.stride).1,
        }
    }
}

/// Projection weights of one attention. Sharing weights between two
/// attentions is just two layers holding the same ids. `wv = None` means the
/// value path is the identity (no learned projection).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: Option<ParamId>,
    pub wo: ParamId,
}

impl AttentionWeights {
    pub fn register<E: Elem>(
        ps: &mut Parameters<E>,
        prefix: &str,
        spec: &AttentionSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let wq = ps.register(&format!("{prefix}.wq"), d, d, ParamKind::Matrix, seed)?;
        let wk = ps.register(&format!("{prefix}.wk"), d, d, ParamKind::Matrix, seed)?;
        let wv = match spec.value_projection {
            ValueProjection::Learned => {
                Some(ps.register(&format!("{prefix}.wv"), d, d, ParamKind::Matrix, seed)?)
            }
            ValueProjection::Identity => None,
        };
        let wo = ps.register(&format!("{prefix}.wo"), d, d, ParamKind::Matrix, seed)?;
        Ok(AttentionWeights { wq, wk, wv, wo })
    }
}

/// Learned filter state; conv carries one length-K kernel per channel plus a
/// per-channel bias, with no cross-channel mixing.
#[derive(Clone, Debug)]
pub struct FilterLayer {
    pub spec: FilterSpec,
    pub kernel: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl FilterLayer {
    pub fn identity() -> Self {
        FilterLayer { spec: FilterSpec::identity(), kernel: None, bias: None }
    }

    pub fn register<E: Elem>(
        ps: &mut Parameters<E>,
        prefix: &str,
        d: usize,
        spec: FilterSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            FilterKind::Conv => {
                let kernel = ps.register(
                    &format!("{prefix}.kernel"),
                    d,
                    spec.kernel,
                    ParamKind::ConvKernel,
                    seed,
                )?;
                let bias = ps.register(&format!("{prefix}.bias"), 1, d, ParamKind::Bias, seed)?;
                Ok(FilterLayer { spec, kernel: Some(kernel), bias: Some(bias) })
            }
            _ => Ok(FilterLayer { spec, kernel: None, bias: None }),
        }
    }
}

/// Validity of filtered positions: a window survives if it covers at least
/// one valid input row.
fn filtered_validity(
    valid: &[bool],
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<bool> {
    let l = valid.len() as i64;
    (0..out_len)
        .map(|t| {
            let base = (t * stride) as i64 - pad_left as i64;
            (0..kernel).any(|j| {
                let src = base + j as i64;
                src >= 0 && src < l && valid[src as usize]
            })
        })
        .collect()
}

/// Apply a length-wise filter to `x` ([L×d]). Returns the filtered tensor and
/// the validity mask of the filtered positions. Invalid input rows never leak
/// into the output: conv zeroes them first, max pool skips them.
pub fn filter_op<E: Elem>(
    g: &mut Graph<E>,
    ps: &Parameters<E>,
    layer: &FilterLayer,
    x: TensorId,
    valid: Option<&[bool]>,
) -> Result<(TensorId, Option<Vec<bool>>)> {
    layer.spec.validate()?;
    let (l, d) = g.shape(x);
    if l == 0 {
        return Err(Error::config("filter_op: empty input".to_string()));
    }
    match layer.spec.kind {
        FilterKind::Identity => Ok((x, valid.map(|v| v.to_vec()))),
        FilterKind::Conv => {
            let (pad_left, out_len) = same_coverage_padding(l, layer.spec.kernel, layer.spec.stride);
            let x = match valid {
                Some(v) if v.iter().any(|&b| !b) => {
                    let mut mask = vec![E::one(); l * d];
                    for (i, &ok) in v.iter().enumerate() {
                        if !ok {
                            mask[i * d..(i + 1) * d].fill(E::zero());
                        }
                    }
                    g.mul_const(x, mask)?
                }
                _ => x,
            };
            let kernel = g.param(ps, layer.kernel.expect("conv filter has kernel"));
            let bias = g.param(ps, layer.bias.expect("conv filter has bias"));
            let out = g.conv1d_depthwise(x, kernel, bias, layer.spec.stride, pad_left, out_len)?;
            let out_valid = valid.map(|v| {
                filtered_validity(v, layer.spec.kernel, layer.spec.stride, pad_left, out_len)
            });
            Ok((out, out_valid))
        }
        FilterKind::MaxPool => {
            let (pad_left, out_len) = same_coverage_padding(l, layer.spec.kernel, layer.spec.stride);
            let out = g.maxpool1d(x, layer.spec.kernel, layer.spec.stride, pad_left, out_len, valid)?;
            let out_valid = valid.map(|v| {
                filtered_validity(v, layer.spec.kernel, layer.spec.stride, pad_left, out_len)
            });
            Ok((out, out_valid))
        }
    }
}

/// Logit divisor: the fixed √d_h of standard attention, or exp(τ) with a
/// learnable τ shared across the heads of one layer.
#[derive(Clone, Copy, Debug)]
pub enum Divisor {
    SqrtHeadDim,
    ExpTau(ParamId),
}

/// Attention output plus the per-head post-softmax score matrices, which the
/// diagnostics (entropy) and tests read back.
pub struct AttentionOutput {
    pub out: TensorId,
    pub probs: Vec<TensorId>,
}

#[allow(clippy::too_many_arguments)]
fn attention_core<E: Elem>(
    g: &mut Graph<E>,
    ps: &Parameters<E>,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    key_mask: Option<&[bool]>,
    filters: Option<(&FilterLayer, &FilterLayer)>,
    divisor: Divisor,
) -> Result<AttentionOutput> {
    spec.validate()?;
    let d = spec.d;
    let dh = spec.head_dim();
    for (name, t) in [("Q", q_in), ("K", k_in), ("V", v_in)] {
        let (rows, cols) = g.shape(t);
        if cols != d || rows == 0 {
            return Err(Error::config(format!(
                "attention: {name} is {rows}x{cols}, expected nonempty width {d}"
            )));
        }
    }
    if g.shape(k_in).0 != g.shape(v_in).0 {
        return Err(Error::config(format!(
            "attention: K has {} rows but V has {}",
            g.shape(k_in).0,
            g.shape(v_in).0
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != g.shape(k_in).0 {
            return Err(Error::config(format!(
                "attention: key mask len {} vs {} keys",
                m.len(),
                g.shape(k_in).0
            )));
        }
    }

    let wq = g.param(ps, w.wq);
    let wk = g.param(ps, w.wk);
    let wo = g.param(ps, w.wo);
    let q_proj = g.matmul(q_in, wq)?;
    let k_proj = g.matmul(k_in, wk)?;
    let v_proj = match w.wv {
        Some(id) => {
            let wv = g.param(ps, id);
            g.matmul(v_in, wv)?
        }
        None => v_in,
    };

    // Filters act on the projected keys/values, before the head split;
    // per-channel ops commute with column slicing.
    let (k_f, kv_valid) = match filters {
        Some((fk, fv)) => {
            let (k_f, kv_valid) = filter_op(g, ps, fk, k_proj, key_mask)?;
            let (v_f, _) = filter_op(g, ps, fv, v_proj, key_mask)?;
            ((k_f, v_f), kv_valid)
        }
        None => ((k_proj, v_proj), key_mask.map(|m| m.to_vec())),
    };
    let (k_f, v_f) = k_f;

    let mask_bias: Option<Vec<E>> = kv_valid.as_ref().and_then(|v| {
        if v.iter().all(|&ok| ok) {
            None
        } else {
            Some(v.iter().map(|&ok| if ok { E::zero() } else { E::neg_infinity() }).collect())
        }
    });

    let tau = match divisor {
        Divisor::SqrtHeadDim => None,
        Divisor::ExpTau(id) => Some(g.param(ps, id)),
    };
    let sqrt_dh = E::from_f64((dh as f64).sqrt());

    let l_q = g.shape(q_in).0;
    let l_k = g.shape(k_f).0;
    let mut heads = Vec::with_capacity(spec.h);
    let mut probs = Vec::with_capacity(spec.h);
    for head in 0..spec.h {
        let q_h = g.slice_cols(q_proj, head * dh, dh)?;
        let k_h = g.slice_cols(k_f, head * dh, dh)?;
        let v_h = g.slice_cols(v_f, head * dh, dh)?;
        g.push_scope("scores");
        let raw = g.matmul_nt(q_h, k_h)?;
        g.pop_scope();
        g.note_score_alloc(l_q, l_k);
        let scaled = match tau {
            Some(t) => g.div_by_exp(raw, t)?,
            None => g.div_const(raw, sqrt_dh),
        };
        let masked = match &mask_bias {
            Some(bias) => g.add_const_rows(scaled, bias.clone())?,
            None => scaled,
        };
        let attn = g.softmax_rows(masked)?;
        let head_out = g.matmul(attn, v_h)?;
        heads.push(head_out);
        probs.push(attn);
    }
    let concat = g.concat_cols(&heads)?;
    let out = g.matmul(concat, wo)?;
    Ok(AttentionOutput { out, probs })
}

/// Standard multi-head attention: per head softmax(Q_h·K_hᵀ/√d_h)·V_h, heads
/// concatenated and projected by W^O.
pub fn multi_head_attention<E: Elem>(
    g: &mut Graph<E>,
    ps: &Parameters<E>,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    attention_core(g, ps, w, spec, q_in, k_in, v_in, key_mask, None, Divisor::SqrtHeadDim)
}

/// Packing attention of ConvLuna: keys and values are filtered after their
/// projections (independent kernels for the two paths when kind = conv) and
/// the logit divisor is exp(τ) — or √d_h when `divisor` says so, which is the
/// filtering-only ablation.
#[allow(clippy::too_many_arguments)]
pub fn rescaled_attention<E: Elem>(
    g: &mut Graph<E>,
    ps: &Parameters<E>,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    filter_k: &FilterLayer,
    filter_v: &FilterLayer,
    divisor: Divisor,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    attention_core(
        g,
        ps,
        w,
        spec,
        q_in,
        k_in,
        v_in,
        key_mask,
        Some((filter_k, filter_v)),
        divisor,
    )
}
