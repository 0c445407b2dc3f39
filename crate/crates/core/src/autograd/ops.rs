use super::kernels::{self, ConvGeom};
use super::{Node, NodesView, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape checked by caller")
}

/// Concatenates tensors along axis 0 (channels for `[C,H,W]`).
pub fn concat_channels<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let tail = first.shape()[1..].to_vec();
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        first.same_tape(p)?;
        let v = p.value();
        if v.shape()[1..] != tail[..] {
            return Err(Error::invalid(format!(
                "concat_channels: trailing shape {:?} vs {:?}",
                &v.shape()[1..],
                tail
            )));
        }
        lead += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(&tail);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    first
        .tape
        .push(Tensor::new(&shape, data)?, Op::Concat(ids.clone()), &ids)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what)?;
        self.tape.push(zip_map(&a, &b, f), op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c), &[self.id])
    }

    /// Multiplies by a one-element tensor (the only broadcast allowed).
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s)?;
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::invalid(format!(
                "mul_scalar needs a one-element multiplier, got {:?}",
                sv.shape()
            )));
        }
        let c = sv.data()[0];
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::MulScalar(self.id, s.id), &[self.id, s.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let v = self.value().map(kernels::sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.tape.push(v, Op::Relu(self.id), &[self.id])
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        let v = self.value().map(kernels::gelu);
        self.tape.push(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x.exp());
        self.tape.push(v, Op::Exp(self.id), &[self.id])
    }

    /// 2-D cross-correlation of a `[Cin,H,W]` input with zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding, groups)?;
        let b = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bv = b.value();
                if bv.shape() != [geom.cout] {
                    return Err(Error::invalid(format!(
                        "conv2d bias shape {:?} does not match Cout={}",
                        bv.shape(),
                        geom.cout
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_deref().map(|t| t.data()), &geom);
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(
            Tensor::new(&[geom.cout, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            &inputs,
        )
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(Error::invalid(format!(
                    "matmul needs 2-D operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.tape.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn transpose2d(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, n) = match *x.shape() {
            [m, n] => (m, n),
            _ => {
                return Err(Error::invalid(format!(
                    "transpose2d needs a 2-D tensor, got {:?}",
                    x.shape()
                )))
            }
        };
        let out = kernels::transpose2d(x.data(), m, n);
        self.tape
            .push(Tensor::new(&[n, m], out)?, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id), &[self.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let y = kernels::softmax_forward(x.data(), x.shape(), axis);
        self.tape
            .push(Tensor::new(x.shape(), y)?, Op::Softmax { x: self.id, axis }, &[self.id])
    }

    /// Normalizes each spatial location of a `[C,H,W]` tensor over its channels.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        if !(eps > T::zero()) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let x = self.value();
        let (c, _, _) = x.chw()?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::invalid(format!(
                "layer_norm affine shapes {:?}/{:?} must both be [{c}]",
                g.shape(),
                b.shape()
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(x.data(), c, g.data(), b.data(), eps);
        self.tape.push(
            Tensor::new(x.shape(), y)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// `[C,H,W] -> [C,1,1]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.chw()?;
        let n = T::from_f64((h * w) as f64);
        let out: Vec<T> = x
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        self.tape
            .push(Tensor::new(&[c, 1, 1], out)?, Op::GlobalAvgPool(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = x.sum() / T::from_f64(x.numel() as f64);
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Slice `[start, start+len)` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let lead = x.shape()[0];
        if len == 0 || start + len > lead {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) out of range for leading dim {lead}",
                start + len
            )));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let data = x.data()[start * inner..(start + len) * inner].to_vec();
        self.tape
            .push(Tensor::new(&shape, data)?, Op::Narrow { x: self.id, start }, &[self.id])
    }

    /// Splits axis 0 into `parts` equal chunks.
    pub fn split_channels(self, parts: usize) -> Result<Vec<Var<'t, T>>> {
        let lead = self.shape()[0];
        if parts == 0 || lead % parts != 0 {
            return Err(Error::invalid(format!(
                "cannot split {lead} channels into {parts} equal parts"
            )));
        }
        let len = lead / parts;
        (0..parts).map(|i| self.narrow(i * len, len)).collect()
    }

    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.chw()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::invalid(format!(
                "pixel_unshuffle({r}) needs H={h} and W={w} divisible by {r}"
            )));
        }
        let y = kernels::pixel_unshuffle(x.data(), c, h, w, r);
        self.tape.push(
            Tensor::new(&[c * r * r, h / r, w / r], y)?,
            Op::PixelUnshuffle { x: self.id, r },
            &[self.id],
        )
    }

    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.chw()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::invalid(format!(
                "pixel_shuffle({r}) needs channels {c} divisible by {}",
                r * r
            )));
        }
        let y = kernels::pixel_shuffle(x.data(), c, h, w, r);
        self.tape.push(
            Tensor::new(&[c / (r * r), h * r, w * r], y)?,
            Op::PixelShuffle { x: self.id, r },
            &[self.id],
        )
    }

    /// Multiplies channel `c` of a `[C,H,W]` tensor by `s[c]`; `s` holds C values.
    pub fn scale_channels(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s)?;
        let (x, sv) = (self.value(), s.value());
        let (c, h, w) = x.chw()?;
        if sv.numel() != c {
            return Err(Error::invalid(format!(
                "scale_channels: {:?} scales for {c} channels",
                sv.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for (ch, chunk) in out.chunks_mut(h * w).enumerate() {
            let k = sv.data()[ch];
            for v in chunk {
                *v = *v * k;
            }
        }
        self.tape.push(
            Tensor::new(x.shape(), out)?,
            Op::ScaleChannels { x: self.id, s: s.id },
            &[self.id, s.id],
        )
    }

    /// Divides each row of a 2-D tensor by `sqrt(sum(row²) + eps)`.
    pub fn l2_normalize_rows(self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, n) = match *x.shape() {
            [m, n] => (m, n),
            _ => {
                return Err(Error::invalid(format!(
                    "l2_normalize_rows needs a 2-D tensor, got {:?}",
                    x.shape()
                )))
            }
        };
        let mut norms = Vec::with_capacity(m);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        self.tape.push(
            Tensor::new(x.shape(), out)?,
            Op::L2NormalizeRows { x: self.id, norms },
            &[self.id],
        )
    }

    /// Mean of `sqrt((self − target)² + eps²)`, a one-element result.
    pub fn charbonnier(self, target: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&target)?;
        if !(eps > T::zero()) {
            return Err(Error::invalid("charbonnier eps must be positive"));
        }
        let (p, t) = (self.value(), target.value());
        same_shape(&p, &t, "charbonnier")?;
        let e2 = eps * eps;
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt())
            .sum();
        let loss = total / T::from_f64(p.numel() as f64);
        self.tape.push(
            Tensor::scalar(loss),
            Op::Charbonnier {
                pred: self.id,
                target: target.id,
                eps,
            },
            &[self.id, target.id],
        )
    }
}

/// Input-gradient contributions of one node given its output gradient.
pub(super) fn backward_rule<T: Scalar>(nv: &NodesView<'_, T>, node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let out = &node.value;
    let elementwise = |id: usize, f: &dyn Fn(usize) -> T| -> (usize, Vec<T>) { (id, (0..g.len()).map(f).collect()) };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (nv.val(*a).data(), nv.val(*b).data());
            let mut r = Vec::new();
            if nv.needs(*a) {
                r.push(elementwise(*a, &|i| g[i] * bv[i]));
            }
            if nv.needs(*b) {
                r.push(elementwise(*b, &|i| g[i] * av[i]));
            }
            r
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
        Op::MulScalar(x, s) => {
            let xv = nv.val(*x).data();
            let c = nv.val(*s).data()[0];
            let mut r = Vec::new();
            if nv.needs(*x) {
                r.push((*x, g.iter().map(|&v| v * c).collect()));
            }
            if nv.needs(*s) {
                let d: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                r.push((*s, vec![d]));
            }
            r
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            vec![elementwise(*x, &|i| g[i] * y[i] * (T::one() - y[i]))]
        }
        Op::Relu(x) => {
            let xv = nv.val(*x).data();
            vec![elementwise(*x, &|i| {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            })]
        }
        Op::Gelu(x) => {
            let xv = nv.val(*x).data();
            vec![elementwise(*x, &|i| g[i] * kernels::gelu_grad(xv[i]))]
        }
        Op::Exp(x) => {
            let y = out.data();
            vec![elementwise(*x, &|i| g[i] * y[i])]
        }
        Op::Conv2d { x, w, b, geom } => {
            let need = [nv.needs(*x), nv.needs(*w), b.is_some_and(|b| nv.needs(b))];
            let (dx, dw, db) = kernels::conv2d_backward(nv.val(*x).data(), nv.val(*w).data(), g, geom, need);
            let mut r = Vec::new();
            r.extend(dx.map(|d| (*x, d)));
            r.extend(dw.map(|d| (*w, d)));
            if let (Some(b), Some(db)) = (b, db) {
                r.push((*b, db));
            }
            r
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (nv.val(*a), nv.val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut r = Vec::new();
            if nv.needs(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, g, false, bv.data(), true, &mut da, false);
                r.push((*a, da));
            }
            if nv.needs(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, av.data(), true, g, false, &mut db, false);
                r.push((*b, db));
            }
            r
        }
        Op::Transpose(x) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            vec![(*x, kernels::transpose2d(g, m, n))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Softmax { x, axis } => vec![(*x, kernels::softmax_backward(out.data(), g, out.shape(), *axis))],
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = nv.val(*gamma).data();
            let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, gv, gv.len());
            vec![(*x, dx), (*gamma, dg), (*beta, db)]
        }
        Op::GlobalAvgPool(x) => {
            let xs = nv.val(*x).shape();
            let hw = xs[1] * xs[2];
            let inv = T::one() / T::from_f64(hw as f64);
            let mut d = Vec::with_capacity(hw * xs[0]);
            for &gc in g {
                d.extend(std::iter::repeat(gc * inv).take(hw));
            }
            vec![(*x, d)]
        }
        Op::Mean(x) => {
            let n = nv.val(*x).numel();
            vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; nv.val(*x).numel()])],
        Op::Concat(ids) => {
            let mut off = 0;
            ids.iter()
                .map(|&id| {
                    let n = nv.val(id).numel();
                    let part = g[off..off + n].to_vec();
                    off += n;
                    (id, part)
                })
                .collect()
        }
        Op::Narrow { x, start } => {
            let xv = nv.val(*x);
            let inner: usize = xv.shape()[1..].iter().product();
            let mut d = vec![T::zero(); xv.numel()];
            d[start * inner..start * inner + g.len()].copy_from_slice(g);
            vec![(*x, d)]
        }
        Op::PixelUnshuffle { x, r } => {
            let (c, h, w) = out.chw().expect("rank 3");
            vec![(*x, kernels::pixel_shuffle(g, c, h, w, *r))]
        }
        Op::PixelShuffle { x, r } => {
            let (c, h, w) = out.chw().expect("rank 3");
            vec![(*x, kernels::pixel_unshuffle(g, c, h, w, *r))]
        }
        Op::ScaleChannels { x, s } => {
            let (xv, sv) = (nv.val(*x), nv.val(*s).data());
            let hw = xv.numel() / sv.len();
            let mut r = Vec::new();
            if nv.needs(*x) {
                r.push(elementwise(*x, &|i| g[i] * sv[i / hw]));
            }
            if nv.needs(*s) {
                let ds = (0..sv.len())
                    .map(|c| (c * hw..(c + 1) * hw).map(|i| g[i] * xv.data()[i]).sum::<T>())
                    .collect();
                r.push((*s, ds));
            }
            r
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = out.data();
            let n = out.shape()[1];
            let mut d = vec![T::zero(); y.len()];
            for (row, &nrm) in norms.iter().enumerate() {
                let span = row * n..(row + 1) * n;
                let dot: T = span.clone().map(|i| g[i] * y[i]).sum();
                for i in span {
                    d[i] = (g[i] - y[i] * dot) / nrm;
                }
            }
            vec![(*x, d)]
        }
        Op::Charbonnier { pred, target, eps } => {
            let (p, t) = (nv.val(*pred).data(), nv.val(*target).data());
            let scale = g[0] / T::from_f64(p.len() as f64);
            let e2 = *eps * *eps;
            let dp: Vec<T> = p
                .iter()
                .zip(t)
                .map(|(&a, &b)| {
                    let d = a - b;
                    scale * d / (d * d + e2).sqrt()
                })
                .collect();
            let dt = dp.iter().map(|&v| -v).collect();
            vec![(*pred, dp), (*target, dt)]
        }
    }
}
