//! Finite-difference verification of the analytic gradients.
//!
//! Every check runs in `f64`: the analytic gradient from the tape is compared
//! against a central difference `(L(θ+h) − L(θ−h)) / 2h` of the scalar probe
//! `L = Σ_k Σ out_k ⊙ R_k` with fixed random weights `R_k`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat_channels, Tape, Var};
use crate::error::{Error, Result};
use crate::model::blocks::{self, Init};
use crate::model::{Branches, FusionKind, Model, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Worst tolerated relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor; smaller tensors are checked exhaustively.
    pub max_coords: usize,
    /// Lower bound of the relative-error denominator. Below it the check is
    /// effectively absolute: `floor * TOLERANCE` = 1e-5, the same absolute
    /// slack as the usual `atol`/`rtol` gradcheck pair.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            max_coords: 12,
            floor: 1e-2,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub worst_rel_err: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst_at: String,
    pub coords: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every tensor in `store` as an input of `f`.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    f: F,
    rng: &mut impl Rng,
    opts: GradCheckOptions,
) -> Result<GradCheck>
where
    F: for<'t, 's> Fn(&Binder<'t, 's, f64>) -> Result<Vec<Var<'t, f64>>>,
{
    // Analytic pass.
    let tape = Tape::new();
    let binder = Binder::new(&tape, store, true);
    let outs = f(&binder)?;
    let probes: Vec<Tensor<f64>> = outs
        .iter()
        .map(|o| Tensor::from_fn(&o.shape(), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let mut loss = None;
    for (o, r) in outs.iter().zip(&probes) {
        let term = o.mul(tape.constant(r.clone()))?.sum()?;
        loss = Some(match loss {
            None => term,
            Some(acc) => term.add(acc)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::invalid("gradient check needs an output"))?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, s, false);
        let outs = f(&binder)?;
        let mut total = 0.0;
        for (o, r) in outs.iter().zip(&probes) {
            total += o.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(total)
    };

    let mut work = store.clone();
    let mut worst = GradCheck {
        worst_rel_err: 0.0,
        worst_at: String::new(),
        coords: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let analytic = grads
            .named(name)
            .ok_or_else(|| Error::State(format!("no gradient recorded for `{name}`")))?
            .clone();
        let n = analytic.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut idx = sample(rng, n, opts.max_coords).into_vec();
            idx.sort_unstable();
            idx
        };
        for i in coords {
            let orig = store.get(name).expect("present").data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[i], numeric, opts.floor);
            worst.coords += 1;
            if err > worst.worst_rel_err || worst.worst_at.is_empty() {
                worst.worst_rel_err = err;
                worst.worst_at = format!("{name}[{i}]");
            }
        }
    }
    Ok(worst)
}

/// Aggregate over the random instances of one suite entry.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub worst_rel_err: f64,
    pub worst_at: String,
    pub instances: usize,
    pub coords: usize,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < TOLERANCE
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Result<(ParamStore<f64>, Probe)>;

/// What to run on a bound store.
#[derive(Clone)]
enum Probe {
    Op(OpKind),
    SimpleGate,
    ChannelAttention,
    CnnBlock,
    Mdta(usize),
    Dswaffn,
    TransformerBlock(usize),
    GateFusion,
    SkFusion,
    Stem,
    Network(ModelConfig),
}

#[derive(Clone, Copy)]
enum OpKind {
    Conv,
    ConvStrided,
    ConvDepthwise,
    MatMul,
    Softmax,
    LayerNorm,
    Add,
    Sub,
    Mul,
    Scale,
    MulScalar,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    GlobalAvgPool,
    Mean,
    Sum,
    ConcatSplit,
    PixelUnshuffle,
    PixelShuffle,
    Transpose,
    ScaleChannels,
    L2Normalize,
    Charbonnier,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v)?;
    }
    Ok(s)
}

fn op_case(kind: OpKind) -> Builder {
    macro_rules! case {
        ($kind:ident, |$rng:ident| $entries:expr) => {
            |$rng: &mut ChaCha8Rng| Ok((store_of($entries)?, Probe::Op(OpKind::$kind)))
        };
    }
    match kind {
        OpKind::Conv => case!(Conv, |r| vec![
            ("x", uniform(r, &[2, 5, 5], -1.0, 1.0)),
            ("w", uniform(r, &[3, 2, 3, 3], -0.5, 0.5)),
            ("b", uniform(r, &[3], -0.5, 0.5)),
        ]),
        OpKind::ConvStrided => case!(ConvStrided, |r| vec![
            ("x", uniform(r, &[2, 6, 6], -1.0, 1.0)),
            ("w", uniform(r, &[4, 2, 3, 3], -0.5, 0.5)),
            ("b", uniform(r, &[4], -0.5, 0.5)),
        ]),
        OpKind::ConvDepthwise => case!(ConvDepthwise, |r| vec![
            ("x", uniform(r, &[3, 5, 5], -1.0, 1.0)),
            ("w", uniform(r, &[3, 1, 3, 3], -0.5, 0.5)),
            ("b", uniform(r, &[3], -0.5, 0.5)),
        ]),
        OpKind::MatMul => case!(MatMul, |r| vec![
            ("a", uniform(r, &[3, 4], -1.0, 1.0)),
            ("b", uniform(r, &[4, 2], -1.0, 1.0)),
        ]),
        OpKind::Softmax => case!(Softmax, |r| vec![("x", uniform(r, &[3, 4, 2], -2.0, 2.0))]),
        OpKind::LayerNorm => case!(LayerNorm, |r| vec![
            ("x", uniform(r, &[8, 3, 3], -1.0, 1.0)),
            ("gamma", uniform(r, &[8], 0.5, 1.5)),
            ("beta", uniform(r, &[8], -0.5, 0.5)),
        ]),
        OpKind::Add => case!(Add, |r| vec![
            ("a", uniform(r, &[2, 3], -1.0, 1.0)),
            ("b", uniform(r, &[2, 3], -1.0, 1.0)),
        ]),
        OpKind::Sub => case!(Sub, |r| vec![
            ("a", uniform(r, &[2, 3], -1.0, 1.0)),
            ("b", uniform(r, &[2, 3], -1.0, 1.0)),
        ]),
        OpKind::Mul => case!(Mul, |r| vec![
            ("a", uniform(r, &[2, 3], -1.0, 1.0)),
            ("b", uniform(r, &[2, 3], -1.0, 1.0)),
        ]),
        OpKind::Scale => case!(Scale, |r| vec![("x", uniform(r, &[5], -1.0, 1.0))]),
        OpKind::MulScalar => case!(MulScalar, |r| vec![
            ("x", uniform(r, &[2, 3], -1.0, 1.0)),
            ("s", uniform(r, &[1], -1.0, 1.0)),
        ]),
        OpKind::Sigmoid => case!(Sigmoid, |r| vec![("x", uniform(r, &[6], -3.0, 3.0))]),
        OpKind::Relu => case!(Relu, |r| vec![("x", away_from_zero(r, &[6]))]),
        OpKind::Gelu => case!(Gelu, |r| vec![("x", uniform(r, &[6], -3.0, 3.0))]),
        OpKind::Exp => case!(Exp, |r| vec![("x", uniform(r, &[6], -2.0, 2.0))]),
        OpKind::GlobalAvgPool => {
            case!(GlobalAvgPool, |r| vec![("x", uniform(r, &[3, 4, 4], -1.0, 1.0))])
        }
        OpKind::Mean => case!(Mean, |r| vec![("x", uniform(r, &[2, 3, 2], -1.0, 1.0))]),
        OpKind::Sum => case!(Sum, |r| vec![("x", uniform(r, &[2, 3, 2], -1.0, 1.0))]),
        OpKind::ConcatSplit => case!(ConcatSplit, |r| vec![
            ("a", uniform(r, &[2, 3, 3], -1.0, 1.0)),
            ("b", uniform(r, &[4, 3, 3], -1.0, 1.0)),
        ]),
        OpKind::PixelUnshuffle => {
            case!(PixelUnshuffle, |r| vec![("x", uniform(r, &[2, 4, 6], -1.0, 1.0))])
        }
        OpKind::PixelShuffle => {
            case!(PixelShuffle, |r| vec![("x", uniform(r, &[8, 2, 3], -1.0, 1.0))])
        }
        OpKind::Transpose => case!(Transpose, |r| vec![("x", uniform(r, &[3, 5], -1.0, 1.0))]),
        OpKind::ScaleChannels => case!(ScaleChannels, |r| vec![
            ("x", uniform(r, &[3, 2, 2], -1.0, 1.0)),
            ("s", uniform(r, &[3], -1.0, 1.0)),
        ]),
        OpKind::L2Normalize => {
            case!(L2Normalize, |r| vec![("x", uniform(r, &[3, 6], -1.0, 1.0))])
        }
        OpKind::Charbonnier => case!(Charbonnier, |r| {
            // Keep |p − t| well above ε: within a few ε of zero the curvature is
            // ~1/ε and a step of 1e-3 no longer resolves the derivative.
            let p = uniform(r, &[2, 3, 3], 0.0, 1.0);
            let d = away_from_zero(r, &[2, 3, 3]);
            let t = Tensor::from_fn(&[2, 3, 3], |i| p.data()[i] + 0.5 * d.data()[i]);
            vec![("p", p), ("t", t)]
        }),
    }
}

fn run_op<'t>(kind: OpKind, p: &Binder<'t, '_, f64>) -> Result<Vec<Var<'t, f64>>> {
    let g = |n: &str| p.get(n);
    let out = match kind {
        OpKind::Conv => g("x")?.conv2d(g("w")?, Some(g("b")?), 1, 1, 1)?,
        OpKind::ConvStrided => g("x")?.conv2d(g("w")?, Some(g("b")?), 2, 1, 1)?,
        OpKind::ConvDepthwise => g("x")?.conv2d(g("w")?, Some(g("b")?), 1, 1, 3)?,
        OpKind::MatMul => g("a")?.matmul(g("b")?)?,
        OpKind::Softmax => {
            let x = g("x")?;
            return Ok(vec![x.softmax(0)?, x.softmax(1)?, x.softmax(2)?]);
        }
        OpKind::LayerNorm => g("x")?.layer_norm(g("gamma")?, g("beta")?, 1e-5)?,
        OpKind::Add => g("a")?.add(g("b")?)?,
        OpKind::Sub => g("a")?.sub(g("b")?)?,
        OpKind::Mul => g("a")?.mul(g("b")?)?,
        OpKind::Scale => g("x")?.scale(-1.7)?,
        OpKind::MulScalar => g("x")?.mul_scalar(g("s")?)?,
        OpKind::Sigmoid => g("x")?.sigmoid()?,
        OpKind::Relu => g("x")?.relu()?,
        OpKind::Gelu => g("x")?.gelu()?,
        OpKind::Exp => g("x")?.exp()?,
        OpKind::GlobalAvgPool => g("x")?.global_avg_pool()?,
        OpKind::Mean => g("x")?.mean()?,
        OpKind::Sum => g("x")?.sum()?,
        OpKind::ConcatSplit => {
            let cat = concat_channels(&[g("a")?, g("b")?])?;
            return cat.split_channels(3);
        }
        OpKind::PixelUnshuffle => g("x")?.pixel_unshuffle(2)?,
        OpKind::PixelShuffle => g("x")?.pixel_shuffle(2)?,
        OpKind::Transpose => g("x")?.transpose2d()?.reshape(&[5, 3, 1])?,
        OpKind::ScaleChannels => g("x")?.scale_channels(g("s")?)?,
        OpKind::L2Normalize => g("x")?.l2_normalize_rows(1e-12)?,
        OpKind::Charbonnier => g("p")?.charbonnier(g("t")?, 1e-3)?,
    };
    Ok(vec![out])
}

fn block_store(
    rng: &mut ChaCha8Rng,
    input_shapes: &[(&str, &[usize])],
    declare: impl FnOnce(&mut Init<'_, f64, ChaCha8Rng>) -> Result<()>,
) -> Result<ParamStore<f64>> {
    let mut init = Init::new(rng, false);
    declare(&mut init)?;
    init.perturb_all(0.1);
    let mut store = init.store;
    for (name, shape) in input_shapes {
        store.insert(*name, uniform(rng, shape, -1.0, 1.0))?;
    }
    Ok(store)
}

fn run_probe<'t>(probe: &Probe, p: &Binder<'t, '_, f64>) -> Result<Vec<Var<'t, f64>>> {
    match probe {
        Probe::Op(kind) => run_op(*kind, p),
        Probe::SimpleGate => Ok(vec![blocks::simple_gate(p.get("x")?)?]),
        Probe::ChannelAttention => Ok(vec![blocks::channel_attention(
            p.get("x")?,
            p.get("ca.weight")?,
            p.get("ca.bias")?,
        )?]),
        Probe::CnnBlock => Ok(vec![blocks::cnn_block(p, "blk", p.get("x")?, true)?]),
        Probe::Mdta(heads) => Ok(vec![blocks::mdta(p, "attn", p.get("x")?, *heads)?]),
        Probe::Dswaffn => Ok(vec![blocks::dswaffn(p, "ffn", p.get("x")?)?]),
        Probe::TransformerBlock(heads) => Ok(vec![blocks::transformer_block(p, "tr", p.get("x")?, *heads)?]),
        Probe::GateFusion => {
            let (a, b) = blocks::gate_fusion(p, "fuse", p.get("f_cnn")?, p.get("f_tr")?)?;
            Ok(vec![a, b])
        }
        Probe::SkFusion => {
            let (a, b) = blocks::sk_fusion(p, "fuse", p.get("f_cnn")?, p.get("f_tr")?)?;
            Ok(vec![a, b])
        }
        Probe::Stem => Ok(vec![blocks::stem(p, p.get("image")?)?]),
        Probe::Network(cfg) => {
            let model = Model::<f64> {
                config: cfg.clone(),
                params: ParamStore::new(),
            };
            Ok(vec![model.forward(p, p.get("image")?)?])
        }
    }
}

/// Configuration of the whole-network check.
pub fn network_check_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        stages: 1,
        heads: vec![2],
        ffn_expansion: 2.0,
        fusion: FusionKind::Gate,
        branches: Branches::Both,
        downsample_per_stage: true,
    }
}

fn suite_cases() -> Vec<(&'static str, Builder)> {
    use OpKind::*;
    let mut cases: Vec<(&'static str, Builder)> = vec![
        ("conv2d", op_case(Conv)),
        ("conv2d_strided", op_case(ConvStrided)),
        ("conv2d_depthwise", op_case(ConvDepthwise)),
        ("matmul", op_case(MatMul)),
        ("softmax", op_case(Softmax)),
        ("layer_norm", op_case(LayerNorm)),
        ("add", op_case(Add)),
        ("sub", op_case(Sub)),
        ("mul", op_case(Mul)),
        ("scale", op_case(Scale)),
        ("mul_scalar", op_case(MulScalar)),
        ("sigmoid", op_case(Sigmoid)),
        ("relu", op_case(Relu)),
        ("gelu", op_case(Gelu)),
        ("exp", op_case(Exp)),
        ("global_avg_pool", op_case(GlobalAvgPool)),
        ("mean", op_case(Mean)),
        ("sum", op_case(Sum)),
        ("concat_split", op_case(ConcatSplit)),
        ("pixel_unshuffle", op_case(PixelUnshuffle)),
        ("pixel_shuffle", op_case(PixelShuffle)),
        ("transpose2d", op_case(Transpose)),
        ("scale_channels", op_case(ScaleChannels)),
        ("l2_normalize_rows", op_case(L2Normalize)),
        ("charbonnier", op_case(Charbonnier)),
    ];
    cases.extend::<[(&'static str, Builder); 10]>([
        ("simple_gate", |r| {
            let s = store_of(vec![("x", uniform(r, &[4, 3, 3], -1.0, 1.0))])?;
            Ok((s, Probe::SimpleGate))
        }),
        ("channel_attention", |r| {
            let s = block_store(r, &[("x", &[3, 4, 4])], |i| i.conv("ca", 3, 3, 1, 1))?;
            Ok((s, Probe::ChannelAttention))
        }),
        ("cnn_block", |r| {
            let s = block_store(r, &[("x", &[2, 6, 6])], |i| {
                blocks::declare_cnn_block(i, "blk", 2, true).map(|_| ())
            })?;
            Ok((s, Probe::CnnBlock))
        }),
        ("mdta", |r| {
            let s = block_store(r, &[("x", &[4, 3, 3])], |i| blocks::declare_mdta(i, "attn", 4, 2))?;
            Ok((s, Probe::Mdta(2)))
        }),
        ("dswaffn", |r| {
            let s = block_store(r, &[("x", &[3, 4, 4])], |i| blocks::declare_dswaffn(i, "ffn", 3, 6))?;
            Ok((s, Probe::Dswaffn))
        }),
        ("transformer_block", |r| {
            let s = block_store(r, &[("x", &[8, 4, 4])], |i| {
                blocks::declare_transformer_block(i, "tr", 8, 2, 16)
            })?;
            Ok((s, Probe::TransformerBlock(2)))
        }),
        ("gate_fusion", |r| {
            let s = block_store(r, &[("f_cnn", &[2, 4, 4]), ("f_tr", &[2, 4, 4])], |i| {
                blocks::declare_gate_fusion(i, "fuse", 2)
            })?;
            Ok((s, Probe::GateFusion))
        }),
        ("sk_fusion", |r| {
            let s = block_store(r, &[("f_cnn", &[3, 4, 4]), ("f_tr", &[3, 4, 4])], |i| {
                blocks::declare_sk_fusion(i, "fuse", 3)
            })?;
            Ok((s, Probe::SkFusion))
        }),
        ("stem", |r| {
            let s = block_store(r, &[("image", &[3, 4, 4])], |i| blocks::declare_stem(i, 4))?;
            Ok((s, Probe::Stem))
        }),
        ("network", |r| {
            let cfg = network_check_config();
            // Start from the identity-initialized network and jitter every
            // parameter. A fully random draw is also a valid point, but the
            // stacked gates then push activations to O(10) and the curvature
            // swamps a step of 1e-3.
            let mut s = Model::<f64>::build(&cfg, r.gen())?.params;
            for (_, t) in s.iter_mut() {
                for v in t.data_mut() {
                    *v += r.gen_range(-0.1..0.1);
                }
            }
            s.insert("image", uniform(r, &[3, 8, 8], 0.0, 1.0))?;
            Ok((s, Probe::Network(cfg)))
        }),
    ]);
    cases
}

/// Runs the full finite-difference suite with `instances` random draws per entry.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let opts = GradCheckOptions::default();
    let mut report = Vec::new();
    for (idx, (name, build)) in suite_cases().into_iter().enumerate() {
        let start = Instant::now();
        let mut entry = SuiteEntry {
            name,
            worst_rel_err: 0.0,
            worst_at: String::new(),
            instances,
            coords: 0,
            seconds: 0.0,
        };
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((idx as u64) << 32) | inst as u64);
            let (store, probe) = build(&mut rng)?;
            let res = check_gradients(&store, |p| run_probe(&probe, p), &mut rng, opts)?;
            entry.coords += res.coords;
            if res.worst_rel_err >= entry.worst_rel_err {
                entry.worst_rel_err = res.worst_rel_err;
                entry.worst_at = res.worst_at;
            }
        }
        entry.seconds = start.elapsed().as_secs_f64();
        report.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp is checked against a deliberately mismatched function: the
        // probe evaluates exp, but we compare with the gradient of 2*exp.
        let store = store_of(vec![("x", Tensor::from_fn(&[3], |i| i as f64 * 0.3))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ok = check_gradients(&store, |p| Ok(vec![p.get("x")?.exp()?]), &mut rng, Default::default()).unwrap();
        assert!(ok.worst_rel_err < 1e-6);
        // A probe whose analytic and numeric paths disagree: scale by a
        // factor that depends on whether the binder is trainable.
        let bad = check_gradients(
            &store,
            |p| {
                let x = p.get("x")?;
                let k = if x.requires_grad() { 2.0 } else { 1.0 };
                Ok(vec![x.scale(k)?])
            },
            &mut rng,
            Default::default(),
        )
        .unwrap();
        assert!(bad.worst_rel_err > 0.4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-3), 0.0);
        assert!((relative_error(1.0, 1.001, 1e-3) - 0.001 / 1.001).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-6, 1e-3) - 1e-3).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-6, 1e-2) - 1e-4).abs() < 1e-12);
    }
}
