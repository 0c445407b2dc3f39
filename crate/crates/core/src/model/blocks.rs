//! Building blocks of the network. Each block has a `declare_*` function that
//! registers its parameters under a prefix and a forward function that reads
//! them back through a [`Binder`].

use rand::Rng;

use crate::autograd::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const QK_NORM_EPS: f64 = 1e-12;

/// Parameter initializer used while declaring blocks.
pub struct Init<'r, T: Scalar, R: Rng> {
    pub store: ParamStore<T>,
    rng: &'r mut R,
    /// Zero the block-final projections so every residual block starts as
    /// the identity.
    identity_init: bool,
}

impl<'r, T: Scalar, R: Rng> Init<'r, T, R> {
    pub fn new(rng: &'r mut R, identity_init: bool) -> Self {
        Init {
            store: ParamStore::new(),
            rng,
            identity_init,
        }
    }

    /// Kaiming-uniform (fan-in, unit gain): `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (3.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(self.rng.gen_range(-bound..bound)));
        self.store.insert(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::from_f64(v)))
    }

    /// Conv weight `[cout, cin/groups, k, k]` plus zero bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, groups: usize) -> Result<()> {
        let cpg = cin / groups;
        self.kaiming(format!("{prefix}.weight"), &[cout, cpg, k, k], cpg * k * k)?;
        self.constant(format!("{prefix}.bias"), &[cout], 0.0)
    }

    /// Block-final projection: zero when identity init is on.
    pub fn projection(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        if self.identity_init {
            self.constant(format!("{prefix}.weight"), &[cout, cin, k, k], 0.0)?;
            self.constant(format!("{prefix}.bias"), &[cout], 0.0)
        } else {
            self.conv(prefix, cin, cout, k, 1)
        }
    }

    pub fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.constant(format!("{prefix}.gamma"), &[c], 1.0)?;
        self.constant(format!("{prefix}.beta"), &[c], 0.0)
    }

    /// Under `identity_init=false` the non-weight parameters (biases, norm
    /// affines, temperatures) are randomized too, so gradient checks see a
    /// generic point rather than a symmetric one.
    pub fn perturb_all(&mut self, scale: f64) {
        if self.identity_init {
            return;
        }
        for (_, t) in self.store.iter_mut() {
            for v in t.data_mut() {
                *v = *v + T::from_f64(self.rng.gen_range(-scale..scale));
            }
        }
    }
}

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Convolution reading `{prefix}.weight` and `{prefix}.bias`.
pub fn conv<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Var<'t, T>> {
    let w = p.get(&name(prefix, "weight"))?;
    let b = p.get(&name(prefix, "bias"))?;
    x.conv2d(w, Some(b), stride, padding, groups)
}

/// Splits channels in half and multiplies the halves.
pub fn simple_gate<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = x.shape()[0];
    if c % 2 != 0 {
        return Err(Error::invalid(format!(
            "simple_gate needs an even channel count, got {c}"
        )));
    }
    let halves = x.split_channels(2)?;
    halves[0].mul(halves[1])
}

/// `x ⊙ conv1×1(global_avg_pool(x))`, with no squashing of the scale.
pub fn channel_attention<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = x.shape()[0];
    if w.shape() != [c, c, 1, 1] || b.shape() != [c] {
        return Err(Error::invalid(format!(
            "channel_attention weights {:?}/{:?} do not match {c} channels",
            w.shape(),
            b.shape()
        )));
    }
    let s = x.global_avg_pool()?.conv2d(w, Some(b), 1, 0, 1)?;
    x.scale_channels(s)
}

// ---------------------------------------------------------------- CNN block

pub fn declare_cnn_block<T: Scalar, R: Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    cin: usize,
    downsample: bool,
) -> Result<usize> {
    let c = if downsample { 2 * cin } else { cin };
    if downsample {
        init.conv(&name(prefix, "down"), cin, c, 3, 1)?;
    }
    init.conv(&name(prefix, "a_expand"), c, 2 * c, 1, 1)?;
    init.conv(&name(prefix, "a_dw"), 2 * c, 2 * c, 1, 2 * c)?;
    init.conv(&name(prefix, "b_expand"), c, 2 * c, 1, 1)?;
    init.conv(&name(prefix, "b_dw"), 2 * c, 2 * c, 3, 2 * c)?;
    init.conv(&name(prefix, "ca"), c, c, 1, 1)?;
    init.projection(&name(prefix, "proj"), c, c, 1)?;
    Ok(c)
}

/// Dual-path gated attention residual block.
///
/// Optional strided 3×3 downsampling (C→2C), then two paths of pointwise
/// expansion, depthwise conv (kernel 1 on path A, kernel 3 on path B) and a
/// simple gate; the paths are summed, rescaled by channel attention,
/// projected, and added back to the (downsampled) input.
pub fn cnn_block<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    downsample: bool,
) -> Result<Var<'t, T>> {
    let x = if downsample {
        let (_, h, w) = x.value().chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "{prefix}: downsampling needs even H and W, got {h}x{w}"
            )));
        }
        conv(p, &name(prefix, "down"), x, 2, 1, 1)?
    } else {
        x
    };
    let c2 = 2 * x.shape()[0];
    let a = conv(p, &name(prefix, "a_expand"), x, 1, 0, 1)?;
    let a = simple_gate(conv(p, &name(prefix, "a_dw"), a, 1, 0, c2)?)?;
    let b = conv(p, &name(prefix, "b_expand"), x, 1, 0, 1)?;
    let b = simple_gate(conv(p, &name(prefix, "b_dw"), b, 1, 1, c2)?)?;
    let y = channel_attention(
        a.add(b)?,
        p.get(&name(prefix, "ca.weight"))?,
        p.get(&name(prefix, "ca.bias"))?,
    )?;
    let y = conv(p, &name(prefix, "proj"), y, 1, 0, 1)?;
    x.add(y)
}

// ---------------------------------------------------------------- attention

pub fn declare_mdta<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, c: usize, heads: usize) -> Result<()> {
    init.conv(&name(prefix, "qkv"), c, 3 * c, 1, 1)?;
    init.conv(&name(prefix, "qkv_dw"), 3 * c, 3 * c, 3, 3 * c)?;
    init.constant(name(prefix, "temperature"), &[heads, 1, 1], 1.0)?;
    init.projection(&name(prefix, "proj"), c, c, 1)
}

/// Multi-head transposed attention over channels; see [`mdta_with_maps`].
pub fn mdta<'t, T: Scalar>(p: &Binder<'t, '_, T>, prefix: &str, x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    Ok(mdta_with_maps(p, prefix, x, heads)?.0)
}

/// Q, K, V come from a pointwise then depthwise 3×3 conv. Per head, Q and K
/// are flattened to `(C/heads) × HW`, row-normalized, and the
/// `(C/heads) × (C/heads)` map `softmax(Q·Kᵀ · τ)` reweights V. Also returns
/// the per-head attention maps.
pub fn mdta_with_maps<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let (c, h, w) = x.value().chw()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!(
            "{prefix}: {heads} heads do not divide {c} channels"
        )));
    }
    let ch = c / heads;
    let qkv = conv(p, &name(prefix, "qkv"), x, 1, 0, 1)?;
    let qkv = conv(p, &name(prefix, "qkv_dw"), qkv, 1, 1, 3 * c)?;
    let parts = qkv.split_channels(3)?;
    let (q, k, v) = (parts[0], parts[1], parts[2]);
    let temperature = p.get(&name(prefix, "temperature"))?;
    let eps = T::from_f64(QK_NORM_EPS);

    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let rows = |t: Var<'t, T>| t.narrow(hd * ch, ch)?.reshape(&[ch, h * w]);
        let qh = rows(q)?.l2_normalize_rows(eps)?;
        let kh = rows(k)?.l2_normalize_rows(eps)?;
        let vh = rows(v)?;
        let tau = temperature.narrow(hd, 1)?;
        let attn = qh.matmul(kh.transpose2d()?)?.mul_scalar(tau)?.softmax(1)?;
        outs.push(attn.matmul(vh)?.reshape(&[ch, h, w])?);
        maps.push(attn);
    }
    let merged = concat_channels(&outs)?;
    Ok((conv(p, &name(prefix, "proj"), merged, 1, 0, 1)?, maps))
}

// ------------------------------------------------------------- feed-forward

pub fn declare_dswaffn<T: Scalar, R: Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    c: usize,
    hidden: usize,
) -> Result<()> {
    init.conv(&name(prefix, "expand"), c, hidden, 1, 1)?;
    init.conv(&name(prefix, "p1_dw"), hidden, hidden, 1, hidden)?;
    init.conv(&name(prefix, "p3_dw"), hidden, hidden, 3, hidden)?;
    init.projection(&name(prefix, "proj"), hidden, c, 1)
}

/// Dual-path shared-weight attention feed-forward block with a trailing residual.
pub fn dswaffn<'t, T: Scalar>(p: &Binder<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&name(prefix, "expand.weight"))?;
    x.add(dswaffn_paths(p, prefix, x, w, w)?)
}

/// Residual branch of [`dswaffn`] (without the final `x +`), with the
/// expansion weight supplied separately for each path. The block itself
/// passes the same shared weight twice; splitting them lets callers attribute
/// the shared gradient to each path.
pub fn dswaffn_paths<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    expand_for_p1: Var<'t, T>,
    expand_for_p3: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let bias = p.get(&name(prefix, "expand.bias"))?;
    let hidden = expand_for_p1.shape()[0];
    let u1 = x.conv2d(expand_for_p1, Some(bias), 1, 0, 1)?;
    let u3 = x.conv2d(expand_for_p3, Some(bias), 1, 0, 1)?;
    let p1 = conv(p, &name(prefix, "p1_dw"), u1, 1, 0, hidden)?;
    let p3 = conv(p, &name(prefix, "p3_dw"), u3, 1, 1, hidden)?;
    let m = p1.sigmoid()?.mul(p3)?.add(p3.sigmoid()?.mul(p1)?)?;
    conv(p, &name(prefix, "proj"), m, 1, 0, 1)
}

// ------------------------------------------------------ transformer block

pub fn declare_transformer_block<T: Scalar, R: Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    c: usize,
    heads: usize,
    hidden: usize,
) -> Result<()> {
    init.norm(&name(prefix, "norm1"), c)?;
    declare_mdta(init, &name(prefix, "attn"), c, heads)?;
    init.norm(&name(prefix, "norm2"), c)?;
    declare_dswaffn(init, &name(prefix, "ffn"), c, hidden)
}

fn layer_norm<'t, T: Scalar>(p: &Binder<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(
        p.get(&name(prefix, "gamma"))?,
        p.get(&name(prefix, "beta"))?,
        T::from_f64(LN_EPS),
    )
}

/// `y = x + mdta(ln(x))`, then `y + ffn(ln(y))` where `ffn` is the residual
/// branch of [`dswaffn`].
pub fn transformer_block<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let a = mdta(
        p,
        &name(prefix, "attn"),
        layer_norm(p, &name(prefix, "norm1"), x)?,
        heads,
    )?;
    let y = x.add(a)?;
    let n = layer_norm(p, &name(prefix, "norm2"), y)?;
    let ffn = name(prefix, "ffn");
    let w = p.get(&name(&ffn, "expand.weight"))?;
    y.add(dswaffn_paths(p, &ffn, n, w, w)?)
}

// ----------------------------------------------------------------- fusion

pub fn declare_gate_fusion<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, c: usize) -> Result<()> {
    init.conv(&name(prefix, "conv_a"), 2 * c, 4 * c, 3, 1)?;
    init.conv(&name(prefix, "conv_b"), 2 * c, 2 * c, 3, 1)?;
    init.projection(&name(prefix, "mix"), 2 * c, 2 * c, 1)
}

fn check_pair<T: Scalar>(prefix: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{prefix}: branch shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Concatenates the branches, runs a residual block with a simple gate in
/// place of ReLU, mixes channels with a 1×1 conv, and adds the two halves of
/// the result back onto the respective branches.
pub fn gate_fusion<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    f_cnn: Var<'t, T>,
    f_tr: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_pair(prefix, &f_cnn, &f_tr)?;
    let g = concat_channels(&[f_cnn, f_tr])?;
    let r = conv(p, &name(prefix, "conv_a"), g, 1, 1, 1)?;
    let r = conv(p, &name(prefix, "conv_b"), simple_gate(r)?, 1, 1, 1)?;
    let h = conv(p, &name(prefix, "mix"), r.add(g)?, 1, 0, 1)?;
    let d = h.split_channels(2)?;
    Ok((f_cnn.add(d[0])?, f_tr.add(d[1])?))
}

pub fn declare_sk_fusion<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, c: usize) -> Result<()> {
    init.conv(&name(prefix, "fc"), c, 2 * c, 1, 1)
}

/// Selective-kernel fusion: per-channel softmax weights over the two branches
/// from the pooled sum; both outputs are the weighted combination.
pub fn sk_fusion<'t, T: Scalar>(
    p: &Binder<'t, '_, T>,
    prefix: &str,
    f_cnn: Var<'t, T>,
    f_tr: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_pair(prefix, &f_cnn, &f_tr)?;
    let c = f_cnn.shape()[0];
    let logits = conv(p, &name(prefix, "fc"), f_cnn.add(f_tr)?.global_avg_pool()?, 1, 0, 1)?;
    let weights = logits.reshape(&[2, c])?.softmax(0)?;
    let w_c = weights.narrow(0, 1)?.reshape(&[c])?;
    let w_t = weights.narrow(1, 1)?.reshape(&[c])?;
    let fused = f_cnn.scale_channels(w_c)?.add(f_tr.scale_channels(w_t)?)?;
    Ok((fused, fused))
}

// ------------------------------------------------------------------- stem

pub fn declare_stem<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, c0: usize) -> Result<()> {
    init.conv("stem.conv", 3, c0, 3, 1)?;
    init.conv("stem.res_a", c0, 2 * c0, 3, 1)?;
    init.conv("stem.res_b", c0, c0, 3, 1)
}

/// 3×3 conv to C₀ followed by one residual block (conv, simple gate, conv).
pub fn stem<'t, T: Scalar>(p: &Binder<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
    let f = conv(p, "stem.conv", image, 1, 1, 1)?;
    let r = simple_gate(conv(p, "stem.res_a", f, 1, 1, 1)?)?;
    f.add(conv(p, "stem.res_b", r, 1, 1, 1)?)
}
